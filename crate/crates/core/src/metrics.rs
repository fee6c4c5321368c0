//! Error rate, synthetic label quality, prediction entropy, inter-pair
//! distances, and the per-interval metrics log.

use std::io::Write;

use ndarray::ArrayView2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::argmax;
use crate::seeded_rng;

/// Floor on the mean distance before inverting it into a quality score.
pub const QUALITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric undefined on an empty set")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least two rows for pair distances, got {0}")]
    TooFewRows(usize),
    #[error("sample_pairs must be at least 1")]
    NoPairs,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Fraction of rows whose argmax (lowest index on ties) differs from the label.
pub fn error_rate(pred: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if pred.nrows() != labels.len() {
        return Err(MetricsError::Shape(format!(
            "{} prediction rows vs {} labels",
            pred.nrows(),
            labels.len()
        )));
    }
    let wrong = pred
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(&row.to_vec()) != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub value: f64,
    /// True when the mean distance fell below [`QUALITY_FLOOR`].
    pub saturated: bool,
}

/// `Q = 1 / max(mean_i ‖ỹ_i − ŷ_i‖₂, QUALITY_FLOOR)`.
pub fn label_quality(y_tilde: ArrayView2<f64>, y_hat: ArrayView2<f64>) -> Result<LabelQuality> {
    if y_tilde.dim() != y_hat.dim() {
        return Err(MetricsError::Shape(format!(
            "synthetic labels {:?} vs reference labels {:?}",
            y_tilde.dim(),
            y_hat.dim()
        )));
    }
    if y_tilde.nrows() == 0 {
        return Err(MetricsError::Empty);
    }
    let mean = y_tilde
        .rows()
        .into_iter()
        .zip(y_hat.rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / y_tilde.nrows() as f64;
    Ok(LabelQuality {
        value: 1.0 / mean.max(QUALITY_FLOOR),
        saturated: mean < QUALITY_FLOOR,
    })
}

/// Mean Shannon entropy of probability rows, in nats; `0·log 0 = 0`.
pub fn mean_entropy(pred: ArrayView2<f64>) -> f64 {
    if pred.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = pred
        .rows()
        .into_iter()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / pred.nrows() as f64
}

fn distance(x: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Monte Carlo mean and maximum of `‖x_i − x_j‖₂` over uniformly drawn pairs `i ≠ j`.
pub fn sampled_pair_distances(
    x: ArrayView2<f64>,
    sample_pairs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = x.nrows();
    if n < 2 {
        return Err(MetricsError::TooFewRows(n));
    }
    if sample_pairs == 0 {
        return Err(MetricsError::NoPairs);
    }
    let mut rng = seeded_rng(seed);
    let (mut total, mut max) = (0.0, 0.0f64);
    for _ in 0..sample_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let d = distance(x, i, j);
        total += d;
        max = max.max(d);
    }
    Ok((total / sample_pairs as f64, max))
}

/// Monte Carlo average inter-pair distance.
pub fn inter_pair_distance(x: ArrayView2<f64>, sample_pairs: usize, seed: u64) -> Result<f64> {
    sampled_pair_distances(x, sample_pairs, seed).map(|(mean, _)| mean)
}

/// Mean over all unordered pairs; O(n²).
pub fn exhaustive_pair_distance(x: ArrayView2<f64>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(MetricsError::TooFewRows(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += distance(x, i, j);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// `ε` as a percentage of the average inter-pair distance; `None` when that is zero.
pub fn eps_pct(epsilon: f64, mean_distance: f64) -> Option<f64> {
    (mean_distance > 0.0).then(|| 100.0 * epsilon / mean_distance)
}

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "L_sup",
    "L_struct",
    "w_s",
    "L_total",
    "epsilon",
    "eps_pct_interdist",
    "train_err",
    "test_err",
    "mean_entropy",
    "label_quality",
];

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub l_sup: f64,
    pub l_struct: f64,
    pub w_s: f64,
    pub l_total: f64,
    pub epsilon: f64,
    pub eps_pct: Option<f64>,
    pub train_err: f64,
    pub test_err: f64,
    pub mean_entropy: f64,
    pub label_quality: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the header and one line per record; fields use shortest round-trip formatting.
pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e.to_string());
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.l_sup.to_string(),
            r.l_struct.to_string(),
            r.w_s.to_string(),
            r.l_total.to_string(),
            r.epsilon.to_string(),
            opt(r.eps_pct),
            r.train_err.to_string(),
            r.test_err.to_string(),
            r.mean_entropy.to_string(),
            opt(r.label_quality),
        ])
        .map_err(io)?;
    }
    w.flush()
}
