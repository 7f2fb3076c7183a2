use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use ndarray::Array2;

use super::{unquote, ExpressionDataset, IngestError, MetadataLine, Provenance};

/// Tokens read as missing cells.
pub const MISSING_SENTINELS: [&str; 4] = ["null", "NA", "NaN", ""];

const TABLE_BEGIN: &str = "!series_matrix_table_begin";
const TABLE_END: &str = "!series_matrix_table_end";

enum State {
    Preamble,
    Header,
    Rows,
    Done,
}

/// Parse a tab-separated GEO series matrix into an unlabeled dataset.
///
/// Rows of the table are features (probes) and columns are samples; the
/// returned matrix is transposed to samples x features.
pub fn parse_series_matrix<R: BufRead>(
    reader: R,
    source: &str,
) -> Result<ExpressionDataset, IngestError> {
    let mut metadata = Vec::new();
    let mut sample_ids: Vec<String> = Vec::new();
    let mut feature_ids: Vec<String> = Vec::new();
    // feature-major while reading
    let mut cells: Vec<f64> = Vec::new();
    let mut state = State::Preamble;
    let mut saw_begin = false;

    for (idx, line) in reader.split(b'\n').enumerate() {
        let lineno = idx + 1;
        let raw = line?;
        let text = String::from_utf8_lossy(&raw);
        let text = text.trim_end_matches(['\r', '\n']);
        let head = text.trim();
        match state {
            State::Preamble | State::Done => {
                if head.eq_ignore_ascii_case(TABLE_BEGIN) && matches!(state, State::Preamble) {
                    saw_begin = true;
                    state = State::Header;
                } else if let Some(rest) = head.strip_prefix('!') {
                    if head.eq_ignore_ascii_case(TABLE_END) {
                        continue;
                    }
                    let mut parts = rest.split('\t');
                    let key = unquote(parts.next().unwrap_or_default()).to_string();
                    let values = parts.map(|v| unquote(v).to_string()).collect();
                    metadata.push(MetadataLine { key, values });
                }
            }
            State::Header => {
                if head.is_empty() {
                    continue;
                }
                if head.eq_ignore_ascii_case(TABLE_END) {
                    return Err(IngestError::MissingHeader { line: lineno });
                }
                let mut parts = text.split('\t').map(unquote);
                if parts.next() != Some("ID_REF") {
                    return Err(IngestError::MissingHeader { line: lineno });
                }
                sample_ids = parts.map(str::to_string).collect();
                state = State::Rows;
            }
            State::Rows => {
                if head.eq_ignore_ascii_case(TABLE_END) {
                    state = State::Done;
                    continue;
                }
                if head.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = text.split('\t').collect();
                if fields.len() != sample_ids.len() + 1 {
                    return Err(IngestError::RaggedRow {
                        line: lineno,
                        expected: sample_ids.len() + 1,
                        found: fields.len(),
                    });
                }
                feature_ids.push(unquote(fields[0]).to_string());
                for (col, field) in fields[1..].iter().enumerate() {
                    cells.push(parse_cell(field, lineno, col + 2)?);
                }
            }
        }
    }

    if !saw_begin || !matches!(state, State::Done) {
        return Err(IngestError::MissingTableMarkers);
    }
    if feature_ids.is_empty() {
        return Err(IngestError::EmptyTable);
    }

    let n_features = feature_ids.len();
    let n_samples = sample_ids.len();
    let by_feature = Array2::from_shape_vec((n_features, n_samples), cells)
        .expect("row widths were checked");
    let values = by_feature.reversed_axes().as_standard_layout().to_owned();
    let missing_mask = values.mapv(f64::is_nan);

    Ok(ExpressionDataset {
        sample_ids,
        feature_ids,
        gene_symbols: None,
        values,
        labels: None,
        class_names: BTreeMap::new(),
        missing_mask,
        provenance: Provenance {
            source: source.to_string(),
            parsed_at: None,
            metadata,
        },
        normalization: None,
        warnings: Vec::new(),
    })
}

fn parse_cell(field: &str, line: usize, column: usize) -> Result<f64, IngestError> {
    let token = unquote(field);
    if MISSING_SENTINELS.contains(&token) {
        return Ok(f64::NAN);
    }
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(IngestError::NonNumericCell {
            line,
            column,
            token: token.to_string(),
        }),
    }
}

/// Write a dataset back out in series-matrix form. Missing cells are written
/// as `null`; labels, symbols and normalization are not representable here.
pub fn write_series_matrix(ds: &ExpressionDataset) -> String {
    let mut out = String::new();
    for m in &ds.provenance.metadata {
        out.push('!');
        out.push_str(&m.key);
        for v in &m.values {
            let _ = write!(out, "\t\"{v}\"");
        }
        out.push('\n');
    }
    out.push_str(TABLE_BEGIN);
    out.push('\n');
    out.push_str("\"ID_REF\"");
    for s in &ds.sample_ids {
        let _ = write!(out, "\t\"{s}\"");
    }
    out.push('\n');
    for (f, fid) in ds.feature_ids.iter().enumerate() {
        let _ = write!(out, "\"{fid}\"");
        for s in 0..ds.n_samples() {
            let v = ds.values[[s, f]];
            if v.is_nan() {
                out.push_str("\tnull");
            } else {
                let _ = write!(out, "\t{v}");
            }
        }
        out.push('\n');
    }
    out.push_str(TABLE_END);
    out.push('\n');
    out
}
