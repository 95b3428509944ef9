use crate::numerics::{ParamStore, Tensor};

/// Linear decay from `base_lr` at step 0 to 0 at `total_steps`; later steps clamp to 0.
pub fn schedule_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

/// AdamW with decoupled weight decay. Moments exist only for parameters that were trainable
/// when the optimizer was built.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
    step: usize,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, base_lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| {
                p.trainable.then(|| {
                    let z = Tensor::zeros(p.value.shape());
                    (z.clone(), z)
                })
            })
            .collect();
        Self {
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        schedule_lr(self.base_lr, self.step, self.total_steps)
    }

    pub fn has_state(&self, index: usize) -> bool {
        self.moments.get(index).is_some_and(Option::is_some)
    }

    /// Applies one update from the gradient buffers at the scheduled learning rate.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        let lr = self.current_lr();
        self.step_with_lr(store, lr);
        lr
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((_, p), state) in store.iter_mut().zip(&mut self.moments) {
            let Some((m, v)) = state else { continue };
            if !p.trainable {
                continue;
            }
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                *w -= lr * self.weight_decay * *w;
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales trainable gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in store.iter_mut() {
            if p.trainable {
                p.grad = p.grad.map(|g| g * s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![value])).unwrap();
        let p = s.get_mut(id);
        p.grad = Tensor::vector(vec![grad]);
        p.trainable = trainable;
        s
    }

    #[test]
    fn single_step_without_decay() {
        let mut s = scalar_store(1.0, 1.0, true);
        let mut opt = AdamW::new(&s, 0.1, 0.0, 10);
        opt.step_with_lr(&mut s, 0.1);
        let w = s.value(s.id("w").unwrap()).item();
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12, "{w}");
        assert!((w - 0.9).abs() < 1e-8);
    }

    #[test]
    fn single_step_with_decay() {
        let mut s = scalar_store(1.0, 1.0, true);
        let mut opt = AdamW::new(&s, 0.1, 0.04, 10);
        assert_eq!(opt.step(&mut s), 0.1);
        let w = s.value(s.id("w").unwrap()).item();
        assert!((w - (0.996 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12, "{w}");
        assert!((w - 0.896).abs() < 1e-8);
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut s = scalar_store(1.0, 5.0, false);
        let mut opt = AdamW::new(&s, 0.1, 0.04, 10);
        assert!(!opt.has_state(0));
        opt.step(&mut s);
        assert_eq!(s.value(s.id("w").unwrap()).item().to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn schedule_points() {
        assert_eq!(schedule_lr(0.4, 0, 10), 0.4);
        assert_eq!(schedule_lr(0.4, 5, 10), 0.2);
        assert_eq!(schedule_lr(0.4, 10, 10), 0.0);
        assert_eq!(schedule_lr(0.4, 11, 10), 0.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
        s.get_mut(id).grad = Tensor::vector(vec![3.0, 4.0]);
        s.get_mut(id).trainable = true;
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        let g = s.get(id).grad.data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
