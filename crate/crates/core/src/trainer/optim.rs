use asda_autodiff::Tensor;

use crate::nets::{ParamGroup, ParamSet};

/// SGD with heavy-ball momentum: `v = μv + g; θ -= lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    /// `grads[i]` belongs to the i-th parameter; `None` means no gradient
    /// reached it and the parameter (and its velocity) stays untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor<f32>>], lr: impl Fn(ParamGroup) -> f64) {
        assert_eq!(grads.len(), params.len());
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            let rate = lr(p.group) as f32;
            for ((w, vi), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *w -= rate * *vi;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor<f32>>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - (b1 as f64).powi(self.t as i32);
        let c2 = 1.0 - (b2 as f64).powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        for (((p, m), v), g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            let Some(g) = g else { continue };
            for (((w, mi), vi), &gi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + self.eps);
            }
        }
    }
}
