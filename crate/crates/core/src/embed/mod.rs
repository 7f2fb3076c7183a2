//! Two-dimensional dataset views for class-separability inspection.

mod pca;
mod tsne;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pca::{fit_pca, pca_embed, PcaFit};
pub use tsne::{
    conditional_probabilities, default_perplexity, joint_probabilities, kl_divergence, student_q,
    tsne_embed, TsneParams,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("need at least 2 samples, found {0}")]
    TooFewSamples(usize),
    #[error("perplexity {perplexity} is outside [1, {max}] for {n} samples")]
    PerplexityTooLarge { perplexity: f64, max: f64, n: usize },
    #[error("t-SNE needs at least 250 iterations, got {0}")]
    IterBudgetTooSmall(usize),
    #[error("input contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMethod {
    Pca,
    Tsne,
}

/// Plot-ready 2-D coordinates plus method-specific diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub method: EmbedMethod,
    pub coords: Array2<f64>,
    pub sample_ids: Vec<String>,
    pub labels: Option<Vec<u8>>,
    pub class_names: BTreeMap<u8, String>,
    /// PCA only.
    pub explained_variance_ratio: Option<Vec<f64>>,
    /// t-SNE only: `(iteration, KL divergence)` pairs.
    pub kl_trace: Option<Vec<(usize, f64)>>,
    pub perplexity: Option<f64>,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
}

impl Embedding2D {
    pub(crate) fn bare(method: EmbedMethod, coords: Array2<f64>) -> Self {
        let n = coords.nrows();
        Embedding2D {
            method,
            coords,
            sample_ids: (0..n).map(|i| i.to_string()).collect(),
            labels: None,
            class_names: BTreeMap::new(),
            explained_variance_ratio: None,
            kl_trace: None,
            perplexity: None,
            seed: None,
            warnings: Vec::new(),
        }
    }

    pub fn with_samples(
        mut self,
        sample_ids: Vec<String>,
        labels: Option<Vec<u8>>,
        class_names: BTreeMap<u8, String>,
    ) -> Self {
        self.sample_ids = sample_ids;
        self.labels = labels;
        self.class_names = class_names;
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,x,y,label\n");
        for (i, id) in self.sample_ids.iter().enumerate() {
            let label = self
                .labels
                .as_ref()
                .map(|l| l[i].to_string())
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{id},{:?},{:?},{label}",
                self.coords[[i, 0]],
                self.coords[[i, 1]]
            );
        }
        out
    }

    /// Minimal standalone SVG scatter, colored by class.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 480.0;
        const PAD: f64 = 40.0;
        let xs = self.coords.column(0);
        let ys = self.coords.column(1);
        let range = |v: ndarray::ArrayView1<f64>| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 1.0, lo + 1.0)
            }
        };
        let (x0, x1) = range(xs);
        let (y0, y1) = range(ys);
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n",
            s = SIZE
        );
        let title = match self.method {
            EmbedMethod::Pca => "PCA",
            EmbedMethod::Tsne => "t-SNE",
        };
        let _ = writeln!(out, "<text x=\"{PAD}\" y=\"24\" font-size=\"16\">{title}</text>");
        for i in 0..self.coords.nrows() {
            let px = PAD + (xs[i] - x0) / (x1 - x0) * (SIZE - 2.0 * PAD);
            let py = SIZE - PAD - (ys[i] - y0) / (y1 - y0) * (SIZE - 2.0 * PAD);
            let color = match self.labels.as_ref().map(|l| l[i]) {
                Some(0) => "#1f77b4",
                Some(_) => "#d62728",
                None => "#555555",
            };
            let _ = writeln!(
                out,
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"5\" fill=\"{color}\"><title>{}</title></circle>",
                self.sample_ids[i]
            );
        }
        for (k, (class, name)) in self.class_names.iter().enumerate() {
            let color = if *class == 0 { "#1f77b4" } else { "#d62728" };
            let y = 24.0 + 18.0 * k as f64;
            let _ = writeln!(
                out,
                "<circle cx=\"{:.0}\" cy=\"{:.0}\" r=\"5\" fill=\"{color}\"/><text x=\"{:.0}\" y=\"{:.0}\" font-size=\"12\">{name}</text>",
                SIZE - 140.0,
                y - 4.0,
                SIZE - 130.0,
                y
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

pub(crate) fn check_finite(values: &ndarray::ArrayView2<f64>) -> Result<(), EmbedError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EmbedError::NonFinite)
    }
}
