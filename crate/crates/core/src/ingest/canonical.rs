//! Canonical on-disk form of a dataset: a magic line, one JSON header line,
//! then one comma-separated matrix row per sample. Floats are written with
//! shortest round-trip formatting, so a read after a write is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ExpressionDataset, IngestError, NormParams, Provenance};

const MAGIC: &str = "#abin-dataset v1";

#[derive(Serialize, Deserialize)]
struct Header {
    n_samples: usize,
    n_features: usize,
    sample_ids: Vec<String>,
    feature_ids: Vec<String>,
    gene_symbols: Option<Vec<String>>,
    labels: Option<Vec<u8>>,
    class_names: BTreeMap<u8, String>,
    missing: Vec<[usize; 2]>,
    provenance: Provenance,
    normalization: Option<NormParams>,
    warnings: Vec<String>,
}

pub fn write_canonical(ds: &ExpressionDataset) -> String {
    let missing = ds
        .missing_mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((r, c), _)| [r, c])
        .collect();
    let header = Header {
        n_samples: ds.n_samples(),
        n_features: ds.n_features(),
        sample_ids: ds.sample_ids.clone(),
        feature_ids: ds.feature_ids.clone(),
        gene_symbols: ds.gene_symbols.clone(),
        labels: ds.labels.clone(),
        class_names: ds.class_names.clone(),
        missing,
        provenance: ds.provenance.clone(),
        normalization: ds.normalization.clone(),
        warnings: ds.warnings.clone(),
    };
    let mut out = String::with_capacity(ds.values.len() * 12);
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for row in ds.values.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn read_canonical<R: BufRead>(reader: R) -> Result<ExpressionDataset, IngestError> {
    let fmt = |m: &str| IngestError::Format(m.to_string());
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(l)) if l.trim_end() == MAGIC => {}
        _ => return Err(fmt("missing magic line")),
    }
    let header_line = lines.next().ok_or_else(|| fmt("missing header"))??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| IngestError::Format(e.to_string()))?;
    let (n, d) = (header.n_samples, header.n_features);
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| IngestError::Format(format!("missing matrix row {r}")))??;
        let before = data.len();
        if d > 0 {
            for tok in line.trim_end().split(',') {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| IngestError::Format(format!("bad number {tok:?} in row {r}")))?;
                data.push(v);
            }
        }
        if data.len() - before != d {
            return Err(IngestError::Format(format!("row {r} has wrong width")));
        }
    }
    let values = Array2::from_shape_vec((n, d), data).map_err(|e| IngestError::Format(e.to_string()))?;
    let mut missing_mask = Array2::from_elem((n, d), false);
    for [r, c] in header.missing {
        if r >= n || c >= d {
            return Err(fmt("missing-cell index out of range"));
        }
        missing_mask[[r, c]] = true;
    }
    let ds = ExpressionDataset {
        sample_ids: header.sample_ids,
        feature_ids: header.feature_ids,
        gene_symbols: header.gene_symbols,
        values,
        labels: header.labels,
        class_names: header.class_names,
        missing_mask,
        provenance: header.provenance,
        normalization: header.normalization,
        warnings: header.warnings,
    };
    ds.check_invariants()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_series_matrix;
    use proptest::prelude::*;

    fn build(values: Vec<f64>, n: usize, d: usize) -> ExpressionDataset {
        let values = Array2::from_shape_vec((n, d), values).unwrap();
        ExpressionDataset {
            sample_ids: (0..n).map(|i| format!("GSM{i}")).collect(),
            feature_ids: (0..d).map(|i| format!("cg{i:06}")).collect(),
            gene_symbols: None,
            missing_mask: values.mapv(f64::is_nan),
            values,
            labels: Some((0..n).map(|i| (i % 2) as u8).collect()),
            class_names: crate::ingest::default_class_names(),
            provenance: Provenance::default(),
            normalization: None,
            warnings: vec![],
        }
    }

    proptest! {
        #[test]
        fn canonical_round_trip_is_bit_exact(
            (n, d, vals) in (1usize..6, 1usize..6).prop_flat_map(|(n, d)| {
                (Just(n), Just(d), proptest::collection::vec(
                    prop_oneof![Just(f64::NAN), -1e12f64..1e12, -1e-300f64..1e-300], n * d))
            })
        ) {
            let ds = build(vals, n, d);
            let back = read_canonical(write_canonical(&ds).as_bytes()).unwrap();
            prop_assert!(ds.identical(&back));
        }
    }

    #[test]
    fn series_matrix_through_canonical() {
        let t = "!Series_title\t\"x \"\"y\"\"\"\n!series_matrix_table_begin\nID_REF\ta\tb\np\t0.1\tnull\nq\t-0\t3e-7\n!series_matrix_table_end\n";
        let ds = parse_series_matrix(t.as_bytes(), "f.txt").unwrap();
        let back = read_canonical(write_canonical(&ds).as_bytes()).unwrap();
        assert!(ds.identical(&back));
        assert_eq!(back.values[[0, 1]].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_truncated() {
        let ds = build(vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        let text = write_canonical(&ds);
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(read_canonical(cut.as_bytes()).is_err());
        assert!(read_canonical("nope\n".as_bytes()).is_err());
    }
}
