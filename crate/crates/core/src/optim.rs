//! Adaptive moment estimation.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update, if set.
    pub clip_norm: Option<f64>,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from per-parameter gradients (indexed like the store).
    /// Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|g| g * g).sum();
                let norm = libm::sqrt(sq);
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![1.0, -1.0])).unwrap();
        let mut opt = Adam::new(&s, 0.1);
        opt.step(&mut s, &[Some(vec![3.0, -0.5])]);
        let d = s.get(s.id("w").unwrap()).data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![1.0])).unwrap();
        let before = s.clone();
        let mut opt = Adam::new(&s, 0.0);
        opt.step(&mut s, &[Some(vec![5.0])]);
        assert_eq!(s, before);
    }
}
