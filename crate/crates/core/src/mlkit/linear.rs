use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ClassifierSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn margin(&self, x: ArrayView1<f64>) -> f64 {
        self.weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 * |w|^2`.
pub(crate) fn fit_logreg(spec: &ClassifierSpec, x: ArrayView2<f64>, y: &[u8]) -> LinearModel {
    let (n, d) = x.dim();
    let target: Array1<f64> = y.iter().map(|&l| l as f64).collect();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    for _ in 0..spec.epochs {
        let z = x.dot(&w) + b;
        let resid = z.mapv(sigmoid) - &target;
        let grad_w = x.t().dot(&resid) / n as f64 + &w * spec.l2;
        let grad_b = resid.sum() / n as f64;
        w.scaled_add(-spec.learning_rate, &grad_w);
        b -= spec.learning_rate * grad_b;
    }
    LinearModel {
        weights: w.to_vec(),
        bias: b,
    }
}

/// Full-batch subgradient descent on mean hinge loss plus `l2/2 * |w|^2`.
pub(crate) fn fit_svm(spec: &ClassifierSpec, x: ArrayView2<f64>, y: &[u8]) -> LinearModel {
    let (n, d) = x.dim();
    let signs: Array1<f64> = y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    for _ in 0..spec.epochs {
        let margins = (x.dot(&w) + b) * &signs;
        // d hinge / d margin = -y where the margin is violated
        let active: Array1<f64> = margins
            .iter()
            .zip(signs.iter())
            .map(|(&m, &s)| if m < 1.0 { -s } else { 0.0 })
            .collect();
        let grad_w = x.t().dot(&active) / n as f64 + &w * spec.l2;
        let grad_b = active.sum() / n as f64;
        w.scaled_add(-spec.learning_rate, &grad_w);
        b -= spec.learning_rate * grad_b;
    }
    LinearModel {
        weights: w.to_vec(),
        bias: b,
    }
}
