//! Adam with decoupled weight decay.

use mist_core::numerics::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= self.lr * (update + self.weight_decay * p[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.1, 0.9, 0.999, 0.0);
        opt.step(&mut store, &[Tensor::vector(vec![3.0, -0.5])]);
        let w = store.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![2.0]));
        let mut opt = AdamW::new(&store, 0.1, 0.9, 0.999, 0.5);
        opt.step(&mut store, &[Tensor::vector(vec![0.0])]);
        assert!((store.tensors()[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![3.0, -4.0]));
        let mut opt = AdamW::new(&store, 0.05, 0.9, 0.999, 0.0);
        for _ in 0..2000 {
            let g = store.tensors()[0].map(|x| 2.0 * (x - 1.0));
            opt.step(&mut store, &[g]);
        }
        assert!(store.tensors()[0].data().iter().all(|x| (x - 1.0).abs() < 1e-3));
    }
}
