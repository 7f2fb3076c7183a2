#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use abin_core::seed::rng_from_seed;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Two-class series matrix: per-feature mean `m_j ~ N(0, 3²)`, class means
/// at `m_j ± shift·s_j` with random sign `s_j`, unit noise. Class 0 comes
/// first. Returns the matrix text and the `sample,label` CSV.
pub fn synthetic_series(seed: u64, n0: usize, n1: usize, d: usize, shift: f64) -> (String, String) {
    let mut rng = rng_from_seed(seed);
    let spread = Normal::new(0.0, 3.0).unwrap();
    let n = n0 + n1;
    let ids: Vec<String> = (1..=n).map(|i| format!("GSM{i}")).collect();
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i >= n0)).collect();
    let quoted = |v: &[String]| v.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join("\t");

    let mut sm = String::new();
    writeln!(sm, "!Series_title\t\"synthetic two-class cohort\"").unwrap();
    writeln!(sm, "!Sample_geo_accession\t{}", quoted(&ids)).unwrap();
    let tissue: Vec<String> = labels
        .iter()
        .map(|&l| if l == 1 { "tissue: tumour".into() } else { "tissue: normal".into() })
        .collect();
    writeln!(sm, "!Sample_characteristics_ch1\t{}", quoted(&tissue)).unwrap();
    writeln!(sm, "!series_matrix_table_begin").unwrap();
    writeln!(sm, "\"ID_REF\"\t{}", quoted(&ids)).unwrap();
    for j in 0..d {
        let m: f64 = spread.sample(&mut rng);
        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let row: Vec<String> = labels
            .iter()
            .map(|&l| {
                let centre = if l == 1 { m + shift * s } else { m - shift * s };
                let noise: f64 = StandardNormal.sample(&mut rng);
                format!("{:?}", centre + noise)
            })
            .collect();
        writeln!(sm, "\"p{j}\"\t{}", row.join("\t")).unwrap();
    }
    writeln!(sm, "!series_matrix_table_end").unwrap();

    let mut csv = String::from("sample,label\n");
    for (id, l) in ids.iter().zip(&labels) {
        writeln!(csv, "{id},{l}").unwrap();
    }
    (sm, csv)
}

/// Writes the standard 6/18, 500-feature cohort (5σ class separation) into
/// `dir` and returns the two file paths.
pub fn write_cohort(dir: &Path, seed: u64) -> (String, String) {
    let (sm, labels) = synthetic_series(seed, 6, 18, 500, 2.5);
    let a = dir.join("series_matrix.txt");
    let b = dir.join("labels.csv");
    std::fs::write(&a, sm).unwrap();
    std::fs::write(&b, labels).unwrap();
    (a.to_string_lossy().into_owned(), b.to_string_lossy().into_owned())
}
