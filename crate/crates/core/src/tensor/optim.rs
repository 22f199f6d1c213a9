use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.0], &self.v[id.0])
    }

    /// Restores optimizer state (used by checkpoint loading).
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::shape("optimizer state does not match the parameter count"));
        }
        for (i, (a, b)) in m.iter().zip(&v).enumerate() {
            if a.len() != self.m[i].len() || b.len() != self.v[i].len() {
                return Err(Error::shape(format!("optimizer moments for parameter {i} have the wrong size")));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update using the gradients stored on each parameter at
    /// learning rate `lr`. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters but the store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let t = store.get(id);
            if t.numel() != self.m[id.0].len() {
                return Err(Error::shape(format!(
                    "parameter `{}` has {} values but its moments have {}",
                    store.name(id),
                    t.numel(),
                    self.m[id.0].len()
                )));
            }
            if let Some(g) = t.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }

        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids() {
            let decay = if store.is_no_decay(id) { 0.0 } else { weight_decay };
            let t = &mut store.tensors_mut()[id.0];
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales the buffers so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_buffers<'a>(grads: impl IntoIterator<Item = &'a mut [f64]>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut bufs: Vec<&mut [f64]> = grads.into_iter().collect();
    let norm = bufs.iter().flat_map(|b| b.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("global gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for b in bufs.iter_mut() {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

/// Global-norm clipping over every gradient held by `store`.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let bufs = store.tensors_mut().iter_mut().filter_map(|t| t.grad_mut().map(|g| g.as_mut_slice()));
    clip_grad_buffers(bufs, max_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn scalar_store(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value), false).unwrap();
        store.get_mut(id).accumulate_grad(&[grad]).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let (mut store, id) = scalar_store(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = scalar_store(1.0, 1.0);
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, cfg.lr).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        assert_abs_diff_eq!(store.get(id).data()[0], 1.0 - 0.1 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn default_weight_decay() {
        assert_eq!(AdamWConfig::default().weight_decay, 1e-5);
    }

    #[test]
    fn decay_skips_no_decay_params() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0), false).unwrap();
        let b = store.add("b", Tensor::scalar(2.0), true).unwrap();
        store.get_mut(w).accumulate_grad(&[0.0]).unwrap();
        store.get_mut(b).accumulate_grad(&[0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }, &store);
        opt.step(&mut store, 0.1).unwrap();
        assert_abs_diff_eq!(store.get(w).data()[0], 2.0 * (1.0 - 0.05), epsilon = 1e-15);
        assert_eq!(store.get(b).data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, _) = scalar_store(1.0, f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        match opt.step(&mut store, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let (store, _) = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut bigger = store.clone();
        bigger.add("extra", Tensor::vector(vec![1.0, 2.0]), false).unwrap();
        assert!(matches!(opt.step(&mut bigger, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn clipping() {
        let mut a = vec![0.3, 0.4];
        let n = clip_grad_buffers([a.as_mut_slice()], 1.0).unwrap();
        assert_abs_diff_eq!(n, 0.5, epsilon = 1e-15);
        assert_eq!(a, vec![0.3, 0.4]);

        let mut b = vec![3.0, 4.0];
        let n = clip_grad_buffers([b.as_mut_slice()], 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert_abs_diff_eq!(b[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1], 0.8, epsilon = 1e-15);

        let mut c = vec![f64::INFINITY];
        assert!(clip_grad_buffers([c.as_mut_slice()], 1.0).is_err());
        assert!(clip_grad_buffers([b.as_mut_slice()], 0.0).is_err());
    }

    #[test]
    fn clip_over_store_spans_all_params() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(0.0), false).unwrap();
        let b = store.add("b", Tensor::scalar(0.0), false).unwrap();
        store.get_mut(a).accumulate_grad(&[3.0]).unwrap();
        store.get_mut(b).accumulate_grad(&[4.0]).unwrap();
        assert_eq!(clip_global_norm(&mut store, 1.0).unwrap(), 5.0);
        assert_abs_diff_eq!(store.get(a).grad().unwrap()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(store.get(b).grad().unwrap()[0], 0.8, epsilon = 1e-15);
    }
}
