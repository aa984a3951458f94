use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Adam with bias correction and the usual defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g)
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &[vec![3.0, -0.01, 0.0]]);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-8);
        assert!((d[1] + 1.9).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::vector(vec![5.0])];
        let mut opt = Adam::new(0.1, &p);
        for _ in 0..500 {
            let g = 2.0 * (p[0].data()[0] - 1.0);
            opt.step(&mut p, &[vec![g]]);
        }
        assert!((p[0].data()[0] - 1.0).abs() < 1e-2);
    }
}
