use std::collections::{BTreeMap, HashMap};

use log::warn;

use super::{unquote, ExpressionDataset, IngestError};

pub fn default_class_names() -> BTreeMap<u8, String> {
    BTreeMap::from([(0, "Normal".to_string()), (1, "Anomalous".to_string())])
}

/// Attach a 0/1 label to every sample.
pub fn assign_labels(
    mut ds: ExpressionDataset,
    labels: &BTreeMap<String, u8>,
    class_names: Option<BTreeMap<u8, String>>,
) -> Result<ExpressionDataset, IngestError> {
    let known: HashMap<&str, usize> = ds
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    if let Some(unknown) = labels.keys().find(|k| !known.contains_key(k.as_str())) {
        return Err(IngestError::UnknownSampleId(unknown.clone()));
    }
    let missing: Vec<String> = ds
        .sample_ids
        .iter()
        .filter(|s| !labels.contains_key(*s))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::UnlabeledSample(missing));
    }
    let mut out = Vec::with_capacity(ds.n_samples());
    for s in &ds.sample_ids {
        let l = labels[s];
        if l > 1 {
            return Err(IngestError::MalformedLabelRow {
                line: 0,
                detail: format!("label {l} for {s} is not 0 or 1"),
            });
        }
        out.push(l);
    }
    ds.labels = Some(out);
    ds.class_names = class_names.unwrap_or_else(default_class_names);
    Ok(ds)
}

/// Parse a `sample_id,label` CSV. A first row whose label is not 0/1 is
/// taken as a header.
pub fn parse_labels_csv(text: &str) -> Result<BTreeMap<String, u8>, IngestError> {
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split([',', '\t']).map(unquote).collect();
        if fields.len() != 2 {
            return Err(IngestError::MalformedLabelRow {
                line: idx + 1,
                detail: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        match fields[1].parse::<u8>() {
            Ok(l @ (0 | 1)) => {
                out.insert(fields[0].to_string(), l);
            }
            _ if idx == 0 => continue,
            _ => {
                return Err(IngestError::MalformedLabelRow {
                    line: idx + 1,
                    detail: format!("label {:?} is not 0 or 1", fields[1]),
                })
            }
        }
    }
    Ok(out)
}

/// Best-effort labels from a metadata key such as `Sample_characteristics_ch1`.
///
/// Each sample's values under `key` are searched (case-insensitively) for
/// `anomalous` first and then `normal`. Samples matching neither are
/// reported as unlabeled. Results should be confirmed by the analyst.
pub fn labels_from_metadata(
    ds: &ExpressionDataset,
    key: &str,
    anomalous: &str,
    normal: &str,
) -> Result<BTreeMap<String, u8>, IngestError> {
    let lines: Vec<_> = ds
        .provenance
        .metadata
        .iter()
        .filter(|m| m.key == key && m.values.len() == ds.n_samples())
        .collect();
    let anomalous = anomalous.to_lowercase();
    let normal = normal.to_lowercase();
    let mut out = BTreeMap::new();
    let mut unresolved = Vec::new();
    for (j, sid) in ds.sample_ids.iter().enumerate() {
        let texts: Vec<String> = lines.iter().map(|m| m.values[j].to_lowercase()).collect();
        if texts.iter().any(|t| t.contains(&anomalous)) {
            out.insert(sid.clone(), 1);
        } else if texts.iter().any(|t| t.contains(&normal)) {
            out.insert(sid.clone(), 0);
        } else {
            unresolved.push(sid.clone());
        }
    }
    if !unresolved.is_empty() {
        return Err(IngestError::UnlabeledSample(unresolved));
    }
    Ok(out)
}

/// Parse a two-column `probe_id<TAB|,>symbol` table. Duplicate probes keep
/// their first symbol; the duplicates are returned as warnings.
pub fn parse_annotation(text: &str) -> Result<(Vec<(String, String)>, Vec<String>), IngestError> {
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if trimmed.contains('\t') {
            trimmed.split('\t').collect()
        } else {
            trimmed.split(',').collect()
        };
        if fields.len() != 2 || unquote(fields[0]).is_empty() || unquote(fields[1]).is_empty() {
            return Err(IngestError::MalformedAnnotationRow { line: idx + 1 });
        }
        let probe = unquote(fields[0]).to_string();
        let symbol = unquote(fields[1]).to_string();
        if let Some(&first) = seen.get(&probe) {
            warnings.push(format!(
                "annotation line {}: duplicate probe {probe}; keeping {} from line {first}",
                idx + 1,
                rows.iter().find(|(p, _)| *p == probe).map(|r| r.1.as_str()).unwrap_or(""),
            ));
            continue;
        }
        seen.insert(probe.clone(), idx + 1);
        rows.push((probe, symbol));
    }
    Ok((rows, warnings))
}

/// Fill `gene_symbols` from an annotation table; unmatched probes display
/// their probe id.
pub fn map_gene_symbols(
    mut ds: ExpressionDataset,
    annotation: &str,
) -> Result<ExpressionDataset, IngestError> {
    let (rows, warnings) = parse_annotation(annotation)?;
    let table: HashMap<&str, &str> = rows
        .iter()
        .map(|(p, s)| (p.as_str(), s.as_str()))
        .collect();
    let symbols: Vec<String> = ds
        .feature_ids
        .iter()
        .map(|f| table.get(f.as_str()).map_or_else(|| f.clone(), |s| s.to_string()))
        .collect();
    for w in &warnings {
        warn!("{w}");
    }
    ds.warnings.extend(warnings);
    ds.gene_symbols = Some(symbols);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_series_matrix;

    fn dataset() -> ExpressionDataset {
        let t = "!Sample_characteristics_ch1\t\"tissue: normal bladder\"\t\"tissue: NMIBC tumour\"\t\"tissue: tumour\"\n\
!series_matrix_table_begin\nID_REF\tS1\tS2\tS3\ncg000001\t1\t2\t3\ncg000002\t4\t5\t6\n!series_matrix_table_end\n";
        parse_series_matrix(t.as_bytes(), "x").unwrap()
    }

    fn map(pairs: &[(&str, u8)]) -> BTreeMap<String, u8> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn labels_and_summary() {
        let ds = assign_labels(dataset(), &map(&[("S1", 0), ("S2", 1), ("S3", 1)]), None).unwrap();
        let s = ds.summary().unwrap();
        assert_eq!((s.n0, s.n1), (1, 2));
        assert_eq!(ds.class_names[&1], "Anomalous");
    }

    #[test]
    fn six_normal_eighteen_tumour() {
        let ids: Vec<String> = (0..24).map(|i| format!("GSM{i}")).collect();
        let mut text = String::from("!series_matrix_table_begin\nID_REF");
        for id in &ids {
            text.push('\t');
            text.push_str(id);
        }
        text.push_str("\np1");
        for i in 0..24 {
            text.push_str(&format!("\t{i}"));
        }
        text.push_str("\n!series_matrix_table_end\n");
        let ds = parse_series_matrix(text.as_bytes(), "x").unwrap();
        let labels: BTreeMap<String, u8> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), u8::from(i >= 6)))
            .collect();
        let s = assign_labels(ds, &labels, None).unwrap().summary().unwrap();
        assert_eq!((s.n0, s.n1), (6, 18));
    }

    #[test]
    fn single_class_is_accepted() {
        let ds = assign_labels(dataset(), &map(&[("S1", 0), ("S2", 0), ("S3", 0)]), None).unwrap();
        assert_eq!(ds.summary().unwrap().n1, 0);
    }

    #[test]
    fn label_guards() {
        let err = assign_labels(dataset(), &map(&[("S1", 0), ("S2", 1)]), None).unwrap_err();
        assert_eq!(err, IngestError::UnlabeledSample(vec!["S3".into()]));
        let err = assign_labels(
            dataset(),
            &map(&[("S1", 0), ("S2", 1), ("S3", 1), ("S9", 0)]),
            None,
        )
        .unwrap_err();
        assert_eq!(err, IngestError::UnknownSampleId("S9".into()));
    }

    #[test]
    fn labels_csv_with_header() {
        let m = parse_labels_csv("sample_id,label\nS1,0\n\"S2\",1\n").unwrap();
        assert_eq!(m, map(&[("S1", 0), ("S2", 1)]));
        assert!(parse_labels_csv("S1,0\nS2,7\n").is_err());
        assert!(parse_labels_csv("S1,0,3\n").is_err());
    }

    #[test]
    fn metadata_rule() {
        let ds = dataset();
        let m = labels_from_metadata(&ds, "Sample_characteristics_ch1", "tumour", "normal").unwrap();
        assert_eq!(m, map(&[("S1", 0), ("S2", 1), ("S3", 1)]));
        let err = labels_from_metadata(&ds, "Sample_characteristics_ch1", "cancer", "normal");
        assert!(matches!(err, Err(IngestError::UnlabeledSample(v)) if v.len() == 2));
    }

    #[test]
    fn symbol_mapping() {
        let ds = map_gene_symbols(dataset(), "cg000001\tRUNX2\n").unwrap();
        assert_eq!(ds.display_symbol(0), "RUNX2");
        assert_eq!(ds.display_symbol(1), "cg000002");
    }

    #[test]
    fn empty_annotation_falls_back_to_probe_ids() {
        let ds = map_gene_symbols(dataset(), "").unwrap();
        assert_eq!(ds.display_symbols(), ["cg000001", "cg000002"]);
    }

    #[test]
    fn duplicate_annotation_first_wins() {
        let ds = map_gene_symbols(dataset(), "cg000001\tRUNX2\ncg000001\tITGB3\ncg000002,CARD8\n")
            .unwrap();
        assert_eq!(ds.display_symbols(), ["RUNX2", "CARD8"]);
        assert_eq!(ds.warnings.len(), 1);
        assert!(ds.warnings[0].contains("duplicate probe cg000001"));
        let ds = map_gene_symbols(dataset(), "cg000002,CARD8\n").unwrap();
        assert_eq!(ds.display_symbol(1), "CARD8");
    }

    #[test]
    fn malformed_annotation() {
        assert_eq!(
            map_gene_symbols(dataset(), "cg1\tA\ncg2\n").unwrap_err(),
            IngestError::MalformedAnnotationRow { line: 2 }
        );
    }
}
