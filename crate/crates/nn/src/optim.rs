use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        if self.m.is_empty() {
            for (_, t) in store.iter() {
                self.m.push(Tensor::zeros(t.shape()));
                self.v.push(Tensor::zeros(t.shape()));
            }
        }
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for i in 0..store.len() {
            let Some(g) = grads.get(ParamId(i)) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(ParamId(i)).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut g = ParamGrads::new(1);
            let x = store.get(id).clone();
            g.accumulate(id, &x.map(|v| 2.0 * v));
            opt.step(&mut store, &g);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
        let before = store.checksum();
        let mut opt = Adam::new(0.0);
        let mut g = ParamGrads::new(1);
        g.accumulate(id, &Tensor::full(&[2], 5.0));
        opt.step(&mut store, &g);
        assert_eq!(before, store.checksum());
    }
}
