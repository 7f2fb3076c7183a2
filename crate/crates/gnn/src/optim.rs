use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Array2<f64>]) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
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

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        for k in 0..params.len() {
            Zip::from(&mut params[k])
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(&grads[k])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Glorot-uniform initialization.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Array2::from_elem((1, 2), 1.0)];
        let g = vec![ndarray::array![[3.0, -0.5]]];
        let mut adam = Adam::new(0.01, &p);
        adam.step(&mut p, &g);
        assert!((p[0][[0, 0]] - 0.99).abs() < 1e-9);
        assert!((p[0][[0, 1]] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![ndarray::array![[5.0, -3.0]]];
        let mut adam = Adam::new(0.1, &p);
        for _ in 0..2000 {
            let g = vec![p[0].mapv(|x| 2.0 * (x - 1.0))];
            adam.step(&mut p, &g);
        }
        assert!(p[0].iter().all(|x| (x - 1.0).abs() < 1e-3));
    }
}
