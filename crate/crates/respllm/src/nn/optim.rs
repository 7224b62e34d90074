//! Adaptive-moment optimizer with decoupled weight decay.

use super::matrix::RealMatrix;
use super::param::ParamStore;

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: usize,
    moments: Vec<Option<(RealMatrix, RealMatrix)>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: vec![None; store.len()],
        }
    }

    /// Apply one update to every trainable parameter from its accumulated
    /// gradient. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (idx, id) in store.ids().enumerate() {
            if !store.get(id).trainable {
                continue;
            }
            if self.moments[idx].is_none() {
                let (r, cl) = store.get(id).value.shape();
                self.moments[idx] = Some((RealMatrix::zeros(r, cl), RealMatrix::zeros(r, cl)));
            }
            let (m, v) = self.moments[idx].as_mut().unwrap();
            let p = store.get_mut(id);
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bias1;
                let vhat = vi / bias2;
                let w = p.value.data()[i];
                p.value.data_mut()[i] =
                    w - c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(value: RealMatrix, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", value, trainable);
        s
    }

    #[test]
    fn zero_grad_zero_decay_leaves_parameter_unchanged() {
        let mut store = store_with(RealMatrix::row_vector(&[1.0, -2.0, 3.0]), true);
        let mut opt = OptimizerState::new(
            OptimizerConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        let before = store.value(store.find("w").unwrap()).clone();
        opt.step(&mut store);
        assert_eq!(store.value(store.find("w").unwrap()), &before);
    }

    #[test]
    fn one_step_on_quadratic_decreases_magnitude() {
        // f(w) = w^2, grad = 2w, starting at w = 1.
        let mut store = store_with(RealMatrix::row_vector(&[1.0]), true);
        let id = store.find("w").unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &store);
        store.get_mut(id).grad.data_mut()[0] = 2.0;
        opt.step(&mut store);
        let w = store.value(id).get(0, 0);
        assert!(w.abs() < 1.0, "expected |w| to shrink, got {w}");
    }

    #[test]
    fn frozen_parameter_ignores_100_steps_of_nonzero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = store_with(RealMatrix::randn(3, 4, 1.0, &mut rng), false);
        let id = store.find("w").unwrap();
        let before = store.value(id).clone();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &store);
        for _ in 0..100 {
            store.get_mut(id).grad = RealMatrix::randn(3, 4, 1.0, &mut rng);
            opt.step(&mut store);
        }
        assert_eq!(store.value(id), &before, "frozen parameter moved");
    }
}
