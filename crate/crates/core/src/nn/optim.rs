use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay. Moments live here, keyed by parameter order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables.
    pub clip: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's gradient slots and returns the gradient
    /// norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if store.len() != self.m.len() {
            return Err(Error::State("optimizer built for a different store".into()));
        }
        let norm = store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm {norm}")));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grad = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = grad[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[j]);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        s.by_index_mut(0).grad = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut opt = AdamW::new(&s, 0.1, 0.0);
        opt.step(&mut s).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
    }
}
