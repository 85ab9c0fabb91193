//! Adam with per-parameter step counters and a cosine learning-rate schedule.

use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied to each parameter so far.
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            steps: vec![0; store.len()],
        }
    }

    /// Updates the parameters listed in `ids` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], ids: &[usize], lr: f64) {
        for &id in ids {
            let Some(g) = grads.get(id).and_then(|g| g.as_ref()) else {
                continue;
            };
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

/// Learning rate for 1-based `epoch` of `epochs`: half-cosine from `lr0`
/// down towards zero.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    let t = (epoch.saturating_sub(1)) as f64 / epochs.max(1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store);
        let g = vec![Some(Tensor::from_vec(&[2], vec![3.0, -0.01]).unwrap())];
        adam.step(&mut store, &g, &[id], 0.1);
        // Bias-corrected first step is lr·sign(g) up to eps.
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
        assert!((store.get(id).data()[1] + 0.9).abs() < 1e-5);
        assert_eq!(adam.steps, vec![1]);
    }

    #[test]
    fn untouched_parameters_stay_bitwise() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[3], 0.3));
        let b = store.add("b", Tensor::full(&[3], 0.7));
        let mut adam = Adam::new(&store);
        let g = vec![Some(Tensor::full(&[3], 1.0)), Some(Tensor::full(&[3], 1.0))];
        adam.step(&mut store, &g, &[a], 0.01);
        assert_eq!(store.get(b), &Tensor::full(&[3], 0.7));
        assert_eq!(adam.steps[b], 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1, 10), 1e-3);
        assert!(cosine_lr(1e-3, 10, 10) < 0.03e-3);
        assert!((cosine_lr(1.0, 6, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            let x = store.get(id).data()[0];
            let g = vec![Some(Tensor::from_vec(&[1], vec![2.0 * (x - 2.0)]).unwrap())];
            adam.step(&mut store, &g, &[id], 0.05);
        }
        assert!((store.get(id).data()[0] - 2.0).abs() < 1e-3);
    }
}
