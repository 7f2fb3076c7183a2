use std::collections::BTreeMap;

use abin_core::seed::{derive_seed, rng_from_seed};
use ndarray::{ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::{Attribution, ExplainError, Method, Target};

fn default_ids(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("f{i}")).collect()
}

/// Monte-Carlo permutation Shapley values.
///
/// Each permutation draws one background row as the reference and switches
/// features to their values in `x` in permutation order; a feature's value
/// is the mean score change when it is switched.
pub fn shapley_sampling<F>(
    f: &F,
    x: ArrayView1<f64>,
    background: ArrayView2<f64>,
    n_permutations: usize,
    seed: u64,
) -> Result<Attribution, ExplainError>
where
    F: Fn(ArrayView1<f64>) -> f64 + Sync,
{
    if background.nrows() == 0 {
        return Err(ExplainError::EmptyBackground);
    }
    if n_permutations == 0 {
        return Err(ExplainError::ZeroPermutations);
    }
    let d = x.len();
    if background.ncols() != d {
        return Err(ExplainError::ShapeMismatch(format!(
            "background has {} columns, x has {d}",
            background.ncols()
        )));
    }
    let deltas: Vec<Vec<f64>> = (0..n_permutations)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, "shapley/permutation", k as u64));
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(&mut rng);
            let r = rng.random_range(0..background.nrows());
            let mut z = background.row(r).to_owned();
            let mut prev = f(z.view());
            let mut out = vec![0.0; d];
            for &i in &order {
                z[i] = x[i];
                let cur = f(z.view());
                out[i] = cur - prev;
                prev = cur;
            }
            out
        })
        .collect();

    let n = n_permutations as f64;
    let mut mean = vec![0.0; d];
    for row in &deltas {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in &deltas {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std_errors: Vec<f64> = var
        .iter()
        .map(|s| if n_permutations > 1 { (s / (n - 1.0) / n).sqrt() } else { f64::NAN })
        .collect();

    let base = background.rows().into_iter().map(|r| f(r)).sum::<f64>() / background.nrows() as f64;
    let output = f(x);
    let residual = (output - base) - mean.iter().sum::<f64>();
    let mut metadata = BTreeMap::new();
    metadata.insert("n_permutations".into(), n_permutations.into());
    metadata.insert("background_rows".into(), background.nrows().into());
    metadata.insert("seed".into(), seed.into());
    Ok(Attribution {
        target: Target::Dataset,
        method: Method::ShapleySampling,
        feature_ids: default_ids(d),
        values: mean,
        feature_values: Some(x.to_vec()),
        std_errors: Some(std_errors),
        base_value: base,
        output,
        additivity_residual: residual,
        label: None,
        metadata,
    })
}

/// Exact Shapley values of a linear score against a background mean:
/// `w_i (x_i − mean_i)`.
pub fn linear_shapley_exact(weights: &[f64], x: &[f64], background_mean: &[f64]) -> Result<Attribution, ExplainError> {
    if weights.len() != x.len() || x.len() != background_mean.len() {
        return Err(ExplainError::ShapeMismatch(format!(
            "weights {}, x {}, mean {}",
            weights.len(),
            x.len(),
            background_mean.len()
        )));
    }
    let values: Vec<f64> = weights
        .iter()
        .zip(x.iter().zip(background_mean))
        .map(|(w, (xi, mi))| w * (xi - mi))
        .collect();
    let dot = |v: &[f64]| weights.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let base = dot(background_mean);
    let output = dot(x);
    Ok(Attribution {
        target: Target::Dataset,
        method: Method::LinearShapleyExact,
        feature_ids: default_ids(x.len()),
        values,
        feature_values: Some(x.to_vec()),
        std_errors: None,
        base_value: base,
        output,
        additivity_residual: 0.0,
        label: None,
        metadata: BTreeMap::new(),
    })
}
