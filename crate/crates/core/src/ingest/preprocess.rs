use std::collections::HashSet;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ExpressionDataset, IngestError, SplitSpec};
use crate::seed::rng_from_seed;

/// Drop repeated feature ids and repeated sample ids, keeping the first
/// occurrence of each.
pub fn dedupe_features(ds: ExpressionDataset) -> ExpressionDataset {
    let keep_cols = first_occurrences(&ds.feature_ids);
    let keep_rows = first_occurrences(&ds.sample_ids);
    let mut out = ds;
    if keep_cols.len() != out.n_features() {
        let dropped = out.n_features() - keep_cols.len();
        out = out.subset_features(&keep_cols);
        out.warnings
            .push(format!("removed {dropped} duplicate feature id(s)"));
    }
    if keep_rows.len() != out.n_samples() {
        let dropped = out.n_samples() - keep_rows.len();
        out = out.subset_samples(&keep_rows);
        out.warnings
            .push(format!("removed {dropped} duplicate sample id(s)"));
    }
    out
}

fn first_occurrences(ids: &[String]) -> Vec<usize> {
    let mut seen = HashSet::new();
    ids.iter()
        .enumerate()
        .filter(|(_, id)| seen.insert(id.as_str()))
        .map(|(i, _)| i)
        .collect()
}

/// Most frequent exact value; ties go to the smallest value.
pub(crate) fn exact_mode(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let (mut best, mut best_count) = (values[0], 0usize);
    let mut i = 0;
    while i < values.len() {
        let mut j = i;
        while j < values.len() && values[j] == values[i] {
            j += 1;
        }
        if j - i > best_count {
            best = values[i];
            best_count = j - i;
        }
        i = j;
    }
    Some(best)
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Class-dependent mode imputation.
///
/// A missing cell of a class-`c` sample takes the mode of the observed
/// values of that feature among class-`c` samples, falling back to the
/// feature's global median and then to 0.
pub fn impute_missing(mut ds: ExpressionDataset) -> Result<ExpressionDataset, IngestError> {
    let labels = ds.labels()?.to_vec();
    let (n, d) = ds.values.dim();
    let mut notes = Vec::new();
    for f in 0..d {
        let column = ds.values.column(f);
        if !column.iter().any(|v| v.is_nan()) {
            continue;
        }
        let mut fill = [None, None];
        for (c, slot) in fill.iter_mut().enumerate() {
            let mut observed: Vec<f64> = (0..n)
                .filter(|&s| labels[s] as usize == c && !column[s].is_nan())
                .map(|s| column[s])
                .collect();
            *slot = exact_mode(&mut observed);
        }
        let mut all: Vec<f64> = column.iter().copied().filter(|v| !v.is_nan()).collect();
        let global = median(&mut all);
        if global.is_none() {
            notes.push(format!(
                "feature {} has no observed values; filled with 0",
                ds.feature_ids[f]
            ));
        }
        for s in 0..n {
            if ds.values[[s, f]].is_nan() {
                ds.values[[s, f]] = fill[labels[s] as usize].or(global).unwrap_or(0.0);
            }
        }
    }
    for note in &notes {
        warn!("{note}");
    }
    ds.warnings.extend(notes);
    Ok(ds)
}

/// Per-feature median of observed values (0 when none observed).
pub fn feature_medians(ds: &ExpressionDataset) -> Vec<f64> {
    ds.values
        .columns()
        .into_iter()
        .map(|c| {
            let mut v: Vec<f64> = c.iter().copied().filter(|x| !x.is_nan()).collect();
            median(&mut v).unwrap_or(0.0)
        })
        .collect()
}

/// Class-agnostic imputation for data without labels, using medians stored
/// from a reference (training) dataset.
pub fn impute_with_medians(
    mut ds: ExpressionDataset,
    medians: &[f64],
) -> Result<ExpressionDataset, IngestError> {
    if medians.len() != ds.n_features() {
        return Err(IngestError::ShapeMismatch {
            expected: medians.len(),
            found: ds.n_features(),
        });
    }
    for ((_, f), v) in ds.values.indexed_iter_mut() {
        if v.is_nan() {
            *v = medians[f];
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    #[default]
    Minmax,
    Zscore,
    None,
}

/// Fitted per-feature normalization: `(x - offset) / scale`, or the fixed
/// constant-feature value when `scale` is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub method: NormMethod,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormParams {
    pub fn fit(ds: &ExpressionDataset, method: NormMethod) -> NormParams {
        let d = ds.n_features();
        let n = ds.n_samples() as f64;
        let mut offset = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for (f, col) in ds.values.columns().into_iter().enumerate() {
            match method {
                NormMethod::Minmax => {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    offset[f] = lo;
                    scale[f] = hi - lo;
                }
                NormMethod::Zscore => {
                    let mean = col.sum() / n;
                    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    offset[f] = mean;
                    scale[f] = var.sqrt();
                }
                NormMethod::None => {}
            }
        }
        NormParams {
            method,
            offset,
            scale,
        }
    }

    fn constant_value(&self) -> f64 {
        match self.method {
            NormMethod::Minmax => 0.5,
            _ => 0.0,
        }
    }

    pub fn apply(&self, ds: &ExpressionDataset) -> Result<ExpressionDataset, IngestError> {
        if ds.n_features() != self.offset.len() {
            return Err(IngestError::ShapeMismatch {
                expected: self.offset.len(),
                found: ds.n_features(),
            });
        }
        if ds.missing_count() > 0 {
            return Err(IngestError::MissingValues);
        }
        let mut out = ds.clone();
        if self.method != NormMethod::None {
            let constant = self.constant_value();
            for ((_, f), v) in out.values.indexed_iter_mut() {
                *v = if self.scale[f] == 0.0 {
                    constant
                } else {
                    (*v - self.offset[f]) / self.scale[f]
                };
            }
        }
        out.normalization = Some(self.clone());
        Ok(out)
    }

    pub(crate) fn select(&self, cols: &[usize]) -> NormParams {
        NormParams {
            method: self.method,
            offset: cols.iter().map(|&c| self.offset[c]).collect(),
            scale: cols.iter().map(|&c| self.scale[c]).collect(),
        }
    }
}

/// Fit per-feature normalization on `ds` and apply it. The fitted
/// parameters are stored on the result for reuse on held-out data.
pub fn normalize(ds: &ExpressionDataset, method: NormMethod) -> Result<ExpressionDataset, IngestError> {
    if ds.missing_count() > 0 {
        return Err(IngestError::MissingValues);
    }
    NormParams::fit(ds, method).apply(ds)
}

/// Seeded train/test partition of sample indices. Both outputs are sorted.
pub fn split_indices(labels: &[u8], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), IngestError> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(IngestError::InvalidFraction(f));
    }
    let mut rng = rng_from_seed(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        (0..=1u8)
            .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    for (c, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(IngestError::ClassTooSmall {
                class: c as u8,
                count: g.len(),
            });
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        let count = g.len();
        let k = ((f * count as f64).round() as usize).clamp(1, count - 1);
        train.extend_from_slice(&g[..k]);
        test.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_stratified(
    ds: &ExpressionDataset,
    spec: &SplitSpec,
) -> Result<(ExpressionDataset, ExpressionDataset), IngestError> {
    let (train, test) = split_indices(ds.labels()?, spec)?;
    Ok((ds.subset_samples(&train), ds.subset_samples(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{assign_labels, parse_series_matrix};
    use ndarray::{array, Array2};
    use std::collections::BTreeMap;

    /// Build a dataset straight from a samples x features matrix.
    pub(crate) fn from_matrix(values: Array2<f64>, labels: Option<Vec<u8>>) -> ExpressionDataset {
        let (n, d) = values.dim();
        let mut text = String::from("!series_matrix_table_begin\nID_REF");
        for s in 0..n {
            text.push_str(&format!("\tS{s}"));
        }
        text.push('\n');
        for f in 0..d {
            text.push_str(&format!("F{f}"));
            for s in 0..n {
                let v = values[[s, f]];
                if v.is_nan() {
                    text.push_str("\tnull");
                } else {
                    text.push_str(&format!("\t{v}"));
                }
            }
            text.push('\n');
        }
        text.push_str("!series_matrix_table_end\n");
        let ds = parse_series_matrix(text.as_bytes(), "m").unwrap();
        match labels {
            Some(l) => {
                let map: BTreeMap<String, u8> = l
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (format!("S{i}"), c))
                    .collect();
                assign_labels(ds, &map, None).unwrap()
            }
            None => ds,
        }
    }

    #[test]
    fn dedupe_keeps_first() {
        let mut ds = from_matrix(array![[1., 2., 3.], [4., 5., 6.]], None);
        ds.feature_ids = vec!["a".into(), "b".into(), "a".into()];
        let out = dedupe_features(ds);
        assert_eq!(out.feature_ids, ["a", "b"]);
        assert_eq!(out.values, array![[1., 2.], [4., 5.]]);
    }

    #[test]
    fn dedupe_identity_without_duplicates() {
        let ds = from_matrix(array![[1., 2.], [3., 4.]], None);
        let out = dedupe_features(ds.clone());
        assert!(out.identical(&ds));
    }

    #[test]
    fn dedupe_samples() {
        let mut ds = from_matrix(array![[1., 2.], [3., 4.], [5., 6.]], Some(vec![0, 1, 1]));
        ds.sample_ids[2] = "S0".into();
        let out = dedupe_features(ds);
        assert_eq!(out.sample_ids, ["S0", "S1"]);
        assert_eq!(out.labels, Some(vec![0, 1]));
    }

    #[test]
    fn dedupe_five_of_hundred() {
        let values = Array2::from_shape_fn((4, 100), |(s, f)| (s * 100 + f) as f64);
        let mut ds = from_matrix(values.clone(), None);
        for (k, f) in [10, 20, 30, 40, 99].iter().enumerate() {
            ds.feature_ids[*f] = format!("F{k}");
        }
        let out = dedupe_features(ds);
        assert_eq!(out.n_features(), 95);
        let kept: Vec<usize> = (0..100).filter(|f| ![10, 20, 30, 40, 99].contains(f)).collect();
        assert_eq!(out.values, values.select(ndarray::Axis(1), &kept));
    }

    #[test]
    fn mode_unambiguous() {
        let nan = f64::NAN;
        let ds = from_matrix(
            array![[0.2], [0.2], [0.9], [nan], [0.5]],
            Some(vec![1, 1, 1, 1, 0]),
        );
        let out = impute_missing(ds).unwrap();
        assert_eq!(out.values[[3, 0]], 0.2);
        assert!(out.missing_mask[[3, 0]]);
    }

    #[test]
    fn mode_tie_takes_smallest() {
        let nan = f64::NAN;
        let ds = from_matrix(array![[0.4], [0.1], [nan], [7.0]], Some(vec![1, 1, 1, 0]));
        assert_eq!(impute_missing(ds).unwrap().values[[2, 0]], 0.1);
    }

    #[test]
    fn mode_oracle_matches_brute_force_count() {
        let vals = [0.3, 0.1, 0.3, 0.7, 0.1, 0.9];
        let mut best = (0usize, f64::INFINITY);
        for &v in &vals {
            let c = vals.iter().filter(|&&w| w == v).count();
            if c > best.0 || (c == best.0 && v < best.1) {
                best = (c, v);
            }
        }
        assert_eq!(exact_mode(&mut vals.to_vec()), Some(best.1));
        assert_eq!(best.1, 0.1);
    }

    #[test]
    fn fallback_global_median() {
        let nan = f64::NAN;
        let ds = from_matrix(
            array![[1.], [2.], [3.], [4.], [nan]],
            Some(vec![0, 0, 0, 0, 1]),
        );
        assert_eq!(impute_missing(ds).unwrap().values[[4, 0]], 2.5);
    }

    #[test]
    fn entirely_missing_feature_becomes_zero() {
        let nan = f64::NAN;
        let ds = from_matrix(array![[nan, 1.], [nan, 2.]], Some(vec![0, 1]));
        let out = impute_missing(ds).unwrap();
        assert_eq!(out.values.column(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn impute_requires_labels() {
        let ds = from_matrix(array![[1.0]], None);
        assert_eq!(impute_missing(ds).unwrap_err(), IngestError::NotLabeled);
    }

    #[test]
    fn minmax_examples() {
        let ds = from_matrix(array![[2., 3.], [4., 3.], [6., 3.]], None);
        let out = normalize(&ds, NormMethod::Minmax).unwrap();
        assert_eq!(out.values, array![[0., 0.5], [0.5, 0.5], [1., 0.5]]);
    }

    #[test]
    fn zscore_population_stdev() {
        let ds = from_matrix(array![[0., 5.], [2., 5.]], None);
        let out = normalize(&ds, NormMethod::Zscore).unwrap();
        assert_eq!(out.values, array![[-1., 0.], [1., 0.]]);
    }

    #[test]
    fn stored_params_reproduce_fit() {
        let ds = from_matrix(array![[0.3, 9.], [1.7, 2.], [-4., 5.5]], None);
        for m in [NormMethod::Minmax, NormMethod::Zscore, NormMethod::None] {
            let fitted = normalize(&ds, m).unwrap();
            let again = fitted.normalization.as_ref().unwrap().apply(&ds).unwrap();
            assert!(fitted.identical(&again));
        }
    }

    #[test]
    fn normalize_rejects_missing() {
        let ds = from_matrix(array![[f64::NAN]], None);
        assert_eq!(normalize(&ds, NormMethod::Minmax).unwrap_err(), IngestError::MissingValues);
    }

    #[test]
    fn split_24_samples() {
        let labels: Vec<u8> = (0..24).map(|i| u8::from(i >= 6)).collect();
        let (train, test) = split_indices(&labels, &SplitSpec::new(0.7, 42)).unwrap();
        let count = |idx: &[usize], c: u8| idx.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!(train.len(), 17);
        assert_eq!(test.len(), 7);
        assert_eq!((count(&train, 0), count(&train, 1)), (4, 13));
        // brute-force: every index in exactly one side
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn split_balanced_half() {
        let labels = [0, 0, 1, 1];
        let (train, test) = split_indices(&labels, &SplitSpec::new(0.5, 3)).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 2);
        assert_eq!(train.iter().filter(|&&i| labels[i] == 1).count(), 1);
    }

    #[test]
    fn split_guards() {
        assert_eq!(
            split_indices(&[0, 1, 1], &SplitSpec::new(0.5, 0)).unwrap_err(),
            IngestError::ClassTooSmall { class: 0, count: 1 }
        );
        assert!(matches!(
            split_indices(&[0, 0, 1, 1], &SplitSpec::new(1.0, 0)),
            Err(IngestError::InvalidFraction(_))
        ));
    }

    #[test]
    fn split_datasets_follow_indices() {
        let values = Array2::from_shape_fn((6, 2), |(s, f)| (10 * s + f) as f64);
        let ds = from_matrix(values, Some(vec![0, 0, 0, 1, 1, 1]));
        let spec = SplitSpec::new(0.5, 11);
        let (tr, te) = split_stratified(&ds, &spec).unwrap();
        let (ti, _) = split_indices(ds.labels().unwrap(), &spec).unwrap();
        assert_eq!(tr.n_samples() + te.n_samples(), 6);
        for (row, &i) in ti.iter().enumerate() {
            assert_eq!(tr.sample_ids[row], ds.sample_ids[i]);
            assert_eq!(tr.values.row(row), ds.values.row(i));
        }
    }
}
