//! Adam with decoupled weight decay, and step learning-rate schedules.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Optimizer moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        AdamState {
            lr,
            weight_decay,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter, then zeroes the gradients.
    ///
    /// Weight decay is decoupled: `p ← p·(1 − lr·wd)` runs before the
    /// bias-corrected Adam step.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.is_empty() {
            return Err(Error::Contract("adam step on an empty parameter store".into()));
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters but the store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));

        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *p *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
            grad.data_mut().fill(T::zero());
        }
        Ok(())
    }
}

/// Step decay: the rate starts at `initial` and is divided by `factor` at
/// each milestone epoch (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(initial: f64, milestones: Vec<usize>) -> Self {
        let mut milestones = milestones;
        milestones.sort_unstable();
        LrSchedule {
            initial,
            milestones,
            factor: 10.0,
        }
    }

    /// Decay at every multiple of `every` below `epochs`.
    pub fn every(initial: f64, every: usize, epochs: usize) -> Self {
        Self::new(initial, (1..).map(|i| i * every).take_while(|&e| e < epochs).collect())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial / self.factor.powi(passed as i32)
    }

    pub fn classic_mnist(epochs: usize) -> Self {
        Self::every(1e-3, 10, epochs)
    }

    pub fn classic_cifar() -> Self {
        Self::new(1e-3, vec![60, 85])
    }

    pub fn inn_mnist() -> Self {
        Self::new(1e-3, vec![8])
    }

    pub fn inn_cifar() -> Self {
        Self::new(1e-3, vec![10])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = scalar_store(0.0);
        let mut adam = AdamState::new(&store, 1e-3, 0.0);
        store.grad_mut(id).data_mut()[0] = 1.0;
        adam.step(&mut store).unwrap();
        let delta = store.get(id).value().item();
        assert!((delta + 9.99999e-4).abs() < 1e-9, "{delta}");
        assert_eq!(store.get(id).grad().item(), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut store, id) = scalar_store(0.75);
        let mut adam = AdamState::new(&store, 1e-3, 0.0);
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(id).value().item(), 0.75);
    }

    #[test]
    fn descends_on_parabola() {
        let (mut store, id) = scalar_store(1.0);
        let mut adam = AdamState::new(&store, 1e-2, 0.0);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let p = store.get(id).value().item();
            store.grad_mut(id).data_mut()[0] = 2.0 * p;
            adam.step(&mut store).unwrap();
            let now = store.get(id).value().item().abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn empty_store_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        let mut adam = AdamState::new(&store, 1e-3, 0.0);
        assert!(adam.step(&mut store).is_err());
    }

    #[test]
    fn schedules() {
        let classic = LrSchedule::classic_mnist(100);
        assert_eq!(classic.lr_at(0), 1e-3);
        assert!((classic.lr_at(10) - 1e-4).abs() < 1e-18);
        assert!((classic.lr_at(25) - 1e-5).abs() < 1e-18);
        let inn = LrSchedule::inn_mnist();
        assert_eq!(inn.lr_at(7), 1e-3);
        assert!((inn.lr_at(8) - 1e-4).abs() < 1e-18);
        assert!((LrSchedule::inn_cifar().lr_at(10) - 1e-4).abs() < 1e-18);
    }
}
