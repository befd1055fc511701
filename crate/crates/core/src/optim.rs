//! Adam updates with a cosine-decayed learning rate.

use crate::params::ParamStore;

/// Learning rate at `step` of `total`, decaying from `base` to zero along a
/// half cosine.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter, then clears all
    /// gradients. Frozen parameters are left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let norm = store.grad_norm();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.first[id], &mut self.second[id]);
            let value = store.value_mut(id).data_mut();
            for j in 0..value.len() {
                let g = grad[j] * clip;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic_and_respects_freezing() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()).unwrap();
        let b = s.add("b", Tensor::new(vec![1], vec![5.0]).unwrap()).unwrap();
        s.set_trainable(b, false);
        let mut opt = Adam::new(&s);
        for _ in 0..2000 {
            let g: Vec<f64> = s.value(a).data().iter().map(|x| 2.0 * x).collect();
            s.add_grad(a, &g);
            s.add_grad(b, &[1.0]);
            opt.step(&mut s, 0.05);
        }
        assert!(s.value(a).data().iter().all(|x| x.abs() < 1e-3));
        assert_eq!(s.value(b).data(), &[5.0]);
    }
}
