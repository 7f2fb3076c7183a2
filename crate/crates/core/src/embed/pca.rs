use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_finite, EmbedError, EmbedMethod, Embedding2D};

/// Principal axes of a centered matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaFit {
    pub mean: Array1<f64>,
    /// One orthonormal component per row; only directions with nonzero
    /// variance are kept.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub total_variance: f64,
}

impl PcaFit {
    pub fn transform(&self, values: ArrayView2<f64>) -> Array2<f64> {
        let centered = &values - &self.mean.view().insert_axis(Axis(0));
        centered.dot(&self.components.t())
    }

    pub fn reconstruct(&self, scores: ArrayView2<f64>) -> Array2<f64> {
        scores.dot(&self.components) + &self.mean.view().insert_axis(Axis(0))
    }
}

fn symmetric_eigen(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Fit up to `k` principal components. Uses the n x n Gram matrix when
/// features outnumber samples.
pub fn fit_pca(values: ArrayView2<f64>, k: usize) -> Result<PcaFit, EmbedError> {
    let (n, d) = values.dim();
    if n < 2 {
        return Err(EmbedError::TooFewSamples(n));
    }
    check_finite(&values)?;
    let mean = values.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &values - &mean.view().insert_axis(Axis(0));
    let denom = (n - 1) as f64;

    let (eigvals, directions) = if d > n {
        let gram = centered.dot(&centered.t());
        let (vals, u) = symmetric_eigen(&gram);
        // v = Xc^T u / sqrt(lambda)
        let v = centered.t().dot(&u);
        (vals, v)
    } else {
        let cov = centered.t().dot(&centered);
        symmetric_eigen(&cov)
    };

    let total: f64 = centered.iter().map(|x| x * x).sum::<f64>() / denom;
    let top = eigvals.first().copied().unwrap_or(0.0).max(0.0);
    let keep: Vec<usize> = (0..eigvals.len())
        .filter(|&i| top > 0.0 && eigvals[i] > 1e-12 * top)
        .take(k)
        .collect();

    let mut components = Array2::<f64>::zeros((keep.len(), d));
    for (row, &i) in keep.iter().enumerate() {
        components.row_mut(row).assign(&directions.column(i));
    }
    // modified Gram-Schmidt; also normalizes the Gram-route directions
    for r in 0..components.nrows() {
        for p in 0..r {
            let proj = components.row(r).dot(&components.row(p));
            let prev = components.row(p).to_owned();
            components.row_mut(r).scaled_add(-proj, &prev);
        }
        let norm = components.row(r).dot(&components.row(r)).sqrt();
        components.row_mut(r).mapv_inplace(|x| x / norm);
        // sign convention: largest-magnitude loading is positive
        let mut best = 0;
        for (j, v) in components.row(r).iter().enumerate() {
            if v.abs() > components[[r, best]].abs() {
                best = j;
            }
        }
        if components[[r, best]] < 0.0 {
            components.row_mut(r).mapv_inplace(|x| -x);
        }
    }

    let explained_variance: Vec<f64> = keep.iter().map(|&i| eigvals[i] / denom).collect();
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(PcaFit {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
        total_variance: total,
    })
}

/// Project samples onto the top `k` components. Missing directions (rank
/// below `k`) yield zero columns.
pub fn pca_embed(values: ArrayView2<f64>, k: usize) -> Result<Embedding2D, EmbedError> {
    let fit = fit_pca(values, k)?;
    let n = values.nrows();
    let scores = fit.transform(values);
    let mut coords = Array2::zeros((n, k));
    for c in 0..scores.ncols().min(k) {
        coords.column_mut(c).assign(&scores.column(c));
    }
    let mut ratios = fit.explained_variance_ratio.clone();
    ratios.resize(k, 0.0);
    let mut emb = Embedding2D::bare(EmbedMethod::Pca, coords);
    if fit.total_variance == 0.0 {
        emb.warnings
            .push("all samples are identical; PCA coordinates are zero".into());
    }
    emb.explained_variance_ratio = Some(ratios);
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::seed::rng_from_seed(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn collinear_samples() {
        let v = array![[1., 2.], [2., 4.], [3., 6.], [-1., -2.]];
        let e = pca_embed(v.view(), 2).unwrap();
        let r = e.explained_variance_ratio.unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert_eq!(r[1], 0.0);
        assert!(e.coords.column(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_samples_warn() {
        let v = array![[1., 2., 3.], [1., 2., 3.], [1., 2., 3.]];
        let e = pca_embed(v.view(), 2).unwrap();
        assert!(e.coords.iter().all(|&x| x == 0.0));
        assert_eq!(e.warnings.len(), 1);
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        for (n, d) in [(8, 30), (30, 6), (12, 12)] {
            let v = random(n, d, (n * d) as u64);
            let fit = fit_pca(v.view(), n.min(d)).unwrap();
            let recon = fit.reconstruct(fit.transform(v.view()).view());
            let centered = &v - &fit.mean.view().insert_axis(Axis(0));
            let err = (&recon - &v).iter().map(|x| x * x).sum::<f64>().sqrt()
                / centered.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err <= 1e-8, "relative error {err} for {n}x{d}");
            let gram = fit.components.dot(&fit.components.t());
            for i in 0..gram.nrows() {
                for j in 0..gram.ncols() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - want).abs() < 1e-10);
                }
            }
            let r = &fit.explained_variance_ratio;
            assert!(r.windows(2).all(|w| w[0] >= w[1]));
            assert!(r.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn gram_and_covariance_routes_agree() {
        let v = random(10, 9, 3);
        let wide = ndarray::concatenate(Axis(1), &[v.view(), Array2::zeros((10, 3)).view()]).unwrap();
        let a = fit_pca(v.view(), 3).unwrap();
        let b = fit_pca(wide.view(), 3).unwrap();
        for i in 0..3 {
            assert!((a.explained_variance[i] - b.explained_variance[i]).abs() < 1e-9);
            let dot: f64 = a.components.row(i).dot(&b.components.row(i).slice(ndarray::s![..9]));
            assert!((dot.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sign_convention() {
        let v = random(6, 4, 8);
        let fit = fit_pca(v.view(), 2).unwrap();
        for row in fit.components.rows() {
            let m = row.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(m > 0.0);
        }
    }
}
