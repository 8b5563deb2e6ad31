//! Adam optimizer over a flat list of parameter tensors.

use super::{Scalar, Tensor};

pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, shapes: &[Tensor<T>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|p| Tensor::zeros(p.raw_dim())).collect(),
            v: shapes.iter().map(|p| Tensor::zeros(p.raw_dim())).collect(),
        }
    }

    /// One update; `grads[i]` may be `None` when a parameter took no part in
    /// the loss (its moments still decay).
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = T::from_f64(self.lr * bc2.sqrt() / bc1);
        let eps = T::from_f64(self.eps);
        let zero_grad: Option<Tensor<T>> = None;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(i).unwrap_or(&zero_grad);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match g {
                Some(g) => {
                    ndarray::Zip::from(p)
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, g| {
                            *m = b1 * *m + (one - b1) * *g;
                            *v = b2 * *v + (one - b2) * *g * *g;
                            *p = *p - lr_t * *m / (v.sqrt() + eps);
                        });
                }
                None => {
                    ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                        *m = b1 * *m;
                        *v = b2 * *v;
                        *p = *p - lr_t * *m / (v.sqrt() + eps);
                    });
                }
            }
        }
    }
}
