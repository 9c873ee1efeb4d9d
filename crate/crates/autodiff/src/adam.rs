use crate::error::{AutodiffError, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Hyperparameters of the Adam optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to every parameter.
    ///
    /// Gradients are validated before anything is written, so a rejected
    /// step leaves both the store and the moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "adam: {} parameters, {} gradients, {} moments",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (id, name, p) in store.iter() {
            let g = grads.get(id);
            if g.shape() != p.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            if !g.all_finite() {
                return Err(AutodiffError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..store.len() {
            let id = crate::ParamId(i);
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::with_lr(0.1));
        let mut g = ParamGrads::zeros_like(&store);
        g.get_mut(crate::ParamId(0)).data_mut()[0] = 1.0;
        adam.step(&mut store, &g).unwrap();
        let p = store.get(crate::ParamId(0)).item();
        assert!((p + 0.1).abs() < 1e-8, "p = {p}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(0.7);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let g = ParamGrads::zeros_like(&store);
        for _ in 0..10 {
            adam.step(&mut store, &g).unwrap();
        }
        assert_eq!(store.get(crate::ParamId(0)).item(), 0.7);
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut g = ParamGrads::zeros_like(&store);
        g.get_mut(crate::ParamId(0)).data_mut()[0] = f64::NAN;
        let err = adam.step(&mut store, &g).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient("p".into()));
        assert_eq!(adam.step_count(), 0);
    }
}
