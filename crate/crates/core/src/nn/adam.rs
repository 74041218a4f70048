use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;

/// Adaptive-moment optimiser over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![F::zero(); num_params], v: vec![F::zero(); num_params], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let one = F::one();
        let bc1 = one - b1.powi(self.t);
        let bc2 = one - b2.powi(self.t);
        let step = F::lit(self.lr) / bc1;
        let eps = F::lit(self.eps);
        let inv_sqrt_bc2 = one / bc2.sqrt();
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [F], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| g * g).sum::<F>().sqrt().to_f64().unwrap_or(f64::INFINITY);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
