//! Exact (O(n^2)) t-SNE.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_finite, EmbedError, EmbedMethod, Embedding2D};
use crate::seed::rng_from_seed;

const ENTROPY_TOL: f64 = 1e-5;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const MIN_ITERS: usize = 250;
const KL_EVERY: usize = 50;
const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    /// `None` picks `min(30, floor((n - 1) / 3))`.
    pub perplexity: Option<f64>,
    pub iters: usize,
    pub seed: u64,
    /// `None` scales with sample count: `max(n / (4 * exaggeration), 50)`.
    pub learning_rate: Option<f64>,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: None,
            iters: 1000,
            seed: 0,
            learning_rate: None,
        }
    }
}

pub fn default_perplexity(n: usize) -> f64 {
    (((n.saturating_sub(1)) / 3) as f64).min(30.0)
}

fn squared_distances(values: ArrayView2<f64>) -> Array2<f64> {
    let n = values.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = values
                .row(i)
                .iter()
                .zip(values.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// Row-conditional Gaussian affinities with per-row bandwidth found by
/// bisection so that each row's entropy equals `ln(perplexity)`.
pub fn conditional_probabilities(dist2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = dist2.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist2[[i, j]])
            .fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        let mut row = vec![0.0; n];
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    row[j] = 0.0;
                    continue;
                }
                let shifted = dist2[[i, j]] - dmin;
                let v = (-shifted * beta).exp();
                row[j] = v;
                sum += v;
                weighted += shifted * v;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for v in row.iter_mut() {
                *v /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { 0.5 * (beta + lo) } else { beta * 0.5 };
            }
        }
        for j in 0..n {
            p[[i, j]] = row[j];
        }
    }
    p
}

/// Symmetrized joint affinities `(P_{j|i} + P_{i|j}) / 2n`, floored.
pub fn joint_probabilities(values: ArrayView2<f64>, perplexity: f64) -> Array2<f64> {
    let n = values.nrows();
    let cond = conditional_probabilities(&squared_distances(values), perplexity);
    let mut p = (&cond + &cond.t()) / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            p[[i, j]] = if i == j { 0.0 } else { p[[i, j]].max(P_FLOOR) };
        }
    }
    p
}

/// Normalized Student-t affinities of 2-D coordinates, plus the unnormalized
/// kernel `1 / (1 + |yi - yj|^2)`.
fn student_kernel(y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = y.nrows();
    let mut num = Array2::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[[i, 0]] - y[[j, 0]];
            let dy = y[[i, 1]] - y[[j, 1]];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[[i, j]] = v;
            num[[j, i]] = v;
            total += 2.0 * v;
        }
    }
    let q = num.mapv(|v| (v / total).max(P_FLOOR));
    let mut q = q;
    for i in 0..n {
        q[[i, i]] = 0.0;
    }
    (q, num)
}

pub fn student_q(coords: &Array2<f64>) -> Array2<f64> {
    student_kernel(coords).0
}

pub fn kl_divergence(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let n = p.nrows();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && p[[i, j]] > 0.0 {
                kl += p[[i, j]] * (p[[i, j]] / q[[i, j]]).ln();
            }
        }
    }
    kl
}

pub fn tsne_embed(values: ArrayView2<f64>, params: &TsneParams) -> Result<Embedding2D, EmbedError> {
    let n = values.nrows();
    if n < 2 {
        return Err(EmbedError::TooFewSamples(n));
    }
    check_finite(&values)?;
    let max = (n - 1) as f64 / 3.0;
    let perplexity = params.perplexity.unwrap_or_else(|| default_perplexity(n));
    if !(1.0..=max).contains(&perplexity) {
        return Err(EmbedError::PerplexityTooLarge { perplexity, max, n });
    }
    if params.iters < MIN_ITERS {
        return Err(EmbedError::IterBudgetTooSmall(params.iters));
    }

    let lr = params
        .learning_rate
        .unwrap_or_else(|| (n as f64 / EXAGGERATION / 4.0).max(50.0));
    let p = joint_probabilities(values, perplexity);
    let mut rng = rng_from_seed(params.seed);
    let mut y = Array2::from_shape_fn((n, 2), |_| 1e-4 * rng.sample::<f64, _>(StandardNormal));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut trace = vec![(0, kl_divergence(&p, &student_q(&y)))];

    for it in 0..params.iters {
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let (q, num) = student_kernel(&y);
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = 4.0 * (exaggeration * p[[i, j]] - q[[i, j]]) * num[[i, j]];
                grad[[i, 0]] += m * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += m * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, u), gain) in grad.iter().zip(update.iter()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                (*gain * 0.8).max(0.01)
            };
        }
        update = &update * momentum - &(&gains * &grad) * lr;
        y += &update;
        for c in 0..2 {
            let mean = y.column(c).sum() / n as f64;
            y.column_mut(c).mapv_inplace(|v| v - mean);
        }
        let done = it + 1;
        if done % KL_EVERY == 0 || done == params.iters {
            trace.push((done, kl_divergence(&p, &student_q(&y))));
        }
    }

    let mut emb = Embedding2D::bare(EmbedMethod::Tsne, y);
    emb.kl_trace = Some(trace);
    emb.perplexity = Some(perplexity);
    emb.seed = Some(params.seed);
    Ok(emb)
}
