use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Linear warmup to `peak`, then inverse-square-root decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64) -> Self {
        Self { peak, warmup }
    }

    /// Learning rate for a 1-based step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.peak / s.sqrt();
        }
        let w = self.warmup as f64;
        if s <= w {
            self.peak * s / w
        } else {
            self.peak * (w / s).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, schedule: LrSchedule, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::new(p.value.shape().to_vec(), vec![0.0; p.value.len()]).expect("same shape"))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            schedule,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step.max(1))
    }
}

/// One Adam update using the gradients stored in `store`; zeroes them
/// afterwards and returns the learning rate applied.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState) -> f64 {
    state.step += 1;
    let lr = state.schedule.lr_at(state.step);
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, m), v) in store
        .params_mut()
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let (value, grad) = (p.value.data_mut(), p.grad.data_mut());
        for i in 0..value.len() {
            let g = grad[i];
            let mi = &mut m.data_mut()[i];
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            let vi = &mut v.data_mut()[i];
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            value[i] -= lr * mhat / (vhat.sqrt() + eps);
            grad[i] = 0.0;
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(1e-3, 100);
        assert!((s.lr_at(100) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(400) - 5e-4).abs() < 1e-15);
        assert!((s.lr_at(50) - 5e-4).abs() < 1e-15);
        assert!(s.lr_at(1) < s.lr_at(2));
    }

    #[test]
    fn adam_moves_against_gradient_and_zeroes() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0, -1.0])).unwrap();
        store.params_mut()[id.index()].grad = Tensor::row_vector(vec![0.5, -0.5]);
        let mut st = OptimizerState::new(&store, LrSchedule::new(0.1, 1), AdamConfig::default());
        let lr = adam_step(&mut store, &mut st);
        assert_eq!(lr, 0.1);
        assert_eq!(st.step, 1);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
    }
}
