//! Similarity and distance kernels on prediction vectors, and analytic
//! gradients of the similarity kernels with respect to additive noise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};

/// Norms below this are treated as zero (correlation and cosine terms then
/// contribute 0).
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance on row sums of a prediction matrix.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Pearson correlation plus cosine similarity.
    CombinedCorrCos,
    Correlation,
    Cosine,
    Euclidean,
    Chebyshev,
    Manhattan,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Euclidean,
        MetricKind::Chebyshev,
        MetricKind::Manhattan,
        MetricKind::Cosine,
        MetricKind::Correlation,
        MetricKind::CombinedCorrCos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::CombinedCorrCos => "combined",
            MetricKind::Correlation => "correlation",
            MetricKind::Cosine => "cosine",
            MetricKind::Euclidean => "euclidean",
            MetricKind::Chebyshev => "chebyshev",
            MetricKind::Manhattan => "manhattan",
        }
    }

    /// True for kinds where larger values mean *less* similar.
    pub fn is_distance(self) -> bool {
        matches!(
            self,
            MetricKind::Euclidean | MetricKind::Chebyshev | MetricKind::Manhattan
        )
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GridError::Validation(format!("unknown metric {s:?}")))
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    x.iter().map(|v| v - m).collect()
}

pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    if nx < NORM_EPS || ny < NORM_EPS {
        return 0.0;
    }
    dot(x, y) / (nx * ny)
}

/// Pearson correlation; 0 when either vector is constant.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    cosine(&centered(x), &centered(y))
}

/// Similarity (or distance, for the distance kinds) between two vectors of
/// equal length.
pub fn similarity(x: &[f64], y: &[f64], kind: MetricKind) -> f64 {
    assert_eq!(x.len(), y.len(), "vector length mismatch");
    let diffs = || x.iter().zip(y).map(|(a, b)| (a - b).abs());
    match kind {
        MetricKind::CombinedCorrCos => correlation(x, y) + cosine(x, y),
        MetricKind::Correlation => correlation(x, y),
        MetricKind::Cosine => cosine(x, y),
        MetricKind::Euclidean => diffs().map(|d| d * d).sum::<f64>().sqrt(),
        MetricKind::Chebyshev => diffs().fold(0.0, f64::max),
        MetricKind::Manhattan => diffs().sum(),
    }
}

/// Gradient of `cos(x, y)` with respect to `x`.
fn cosine_grad(x: &[f64], y: &[f64]) -> Vec<f64> {
    let (nx, ny) = (norm(x), norm(y));
    if nx < NORM_EPS || ny < NORM_EPS {
        return vec![0.0; x.len()];
    }
    let c = dot(x, y) / (nx * nx * nx * ny);
    x.iter().zip(y).map(|(xi, yi)| yi / (nx * ny) - c * xi).collect()
}

/// Gradient of `corr(x, y)` with respect to `x`. The centering projection
/// is symmetric and idempotent, so this is the cosine gradient evaluated on
/// the centered vectors.
fn correlation_grad(x: &[f64], y: &[f64]) -> Vec<f64> {
    cosine_grad(&centered(x), &centered(y))
}

/// Value and gradient of `sim(x, y)` with respect to `x`.
pub fn similarity_with_grad(x: &[f64], y: &[f64], kind: MetricKind) -> Result<(f64, Vec<f64>)> {
    assert_eq!(x.len(), y.len(), "vector length mismatch");
    let grad = match kind {
        MetricKind::Cosine => cosine_grad(x, y),
        MetricKind::Correlation => correlation_grad(x, y),
        MetricKind::CombinedCorrCos => {
            let mut g = cosine_grad(x, y);
            for (gi, ci) in g.iter_mut().zip(correlation_grad(x, y)) {
                *gi += ci;
            }
            g
        }
        other => return Err(GridError::UnsupportedMetric(other.name())),
    };
    Ok((similarity(x, y, kind), grad))
}

/// Gradient of `sim(x + s, y)` with respect to the noise `s`.
pub fn similarity_gradient(x: &[f64], y: &[f64], s: &[f64], kind: MetricKind) -> Result<Vec<f64>> {
    let shifted: Vec<f64> = x.iter().zip(s).map(|(a, b)| a + b).collect();
    similarity_with_grad(&shifted, y, kind).map(|(_, g)| g)
}

/// Per-node probability vectors over `num_classes` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    num_classes: usize,
    data: Vec<f64>,
}

impl PredictionMatrix {
    /// Validates that each row lies in `[0,1]` entrywise and sums to 1.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_classes = rows.first().map_or(0, Vec::len);
        if num_classes < 2 && !rows.is_empty() {
            return Err(GridError::Validation("prediction rows need at least 2 classes".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * num_classes);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != num_classes {
                return Err(GridError::Validation(format!(
                    "row {i} has {} entries (expected {num_classes})",
                    row.len()
                )));
            }
            check_probability_row(row).map_err(|m| GridError::Validation(format!("row {i}: {m}")))?;
            data.extend_from_slice(row);
        }
        Ok(PredictionMatrix { num_classes, data })
    }

    pub fn num_rows(&self) -> usize {
        if self.num_classes == 0 {
            0
        } else {
            self.data.len() / self.num_classes
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.num_classes.max(1))
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    /// Indices of rows whose maximum is attained by more than one class.
    pub fn tied_argmax_rows(&self) -> Vec<usize> {
        (0..self.num_rows())
            .filter(|&i| strict_argmax(self.row(i)).is_none())
            .collect()
    }

    pub fn similarity(&self, i: usize, j: usize, kind: MetricKind) -> f64 {
        similarity(self.row(i), self.row(j), kind)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.is_empty() || &headers[0] != "id" {
            return Err(GridError::parse(path, 1, "header must start with id"));
        }
        let width = headers.len();
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (ix, rec) in reader.records().enumerate() {
            let line = ix + 2;
            let rec = rec.map_err(|e| GridError::parse(path, line, e.to_string()))?;
            if rec.len() != width {
                return Err(GridError::parse(path, line, format!("expected {width} fields")));
            }
            let id = rec[0]
                .parse::<usize>()
                .map_err(|e| GridError::parse(path, line, format!("bad id: {e}")))?;
            let row = (1..width)
                .map(|k| {
                    rec[k]
                        .parse::<f64>()
                        .map_err(|e| GridError::parse(path, line, format!("bad p{}: {e}", k - 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((id, row));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
            return Err(GridError::Validation(format!(
                "prediction ids must be exactly 0..{}",
                rows.len()
            )));
        }
        PredictionMatrix::new(rows.into_iter().map(|r| r.1).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string()];
        header.extend((0..self.num_classes).map(|a| format!("p{a}")));
        w.write_record(&header)?;
        for (i, row) in self.rows().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn check_probability_row(row: &[f64]) -> std::result::Result<(), String> {
    if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(format!("entry {p} outside [0,1]"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

/// Index of the first maximal entry.
pub fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Index of the maximal entry, or `None` if the maximum is shared.
pub fn strict_argmax(x: &[f64]) -> Option<usize> {
    let top = argmax(x);
    let tied = x.iter().enumerate().any(|(i, &v)| i != top && v == x[top]);
    (!tied).then_some(top)
}

/// Arithmetic mean of `kind` over the given node pairs.
pub fn mean_pair_similarity(preds: &PredictionMatrix, pairs: &[(usize, usize)], kind: MetricKind) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GridError::EmptyPairs);
    }
    let total: f64 = pairs.iter().map(|&(i, j)| preds.similarity(i, j, kind)).sum();
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_vectors() {
        let x = [0.5, 0.5];
        assert_abs_diff_eq!(cosine(&x, &x), 1.0, epsilon = 1e-15);
        assert_eq!(correlation(&x, &x), 0.0);
        assert_abs_diff_eq!(similarity(&x, &x, MetricKind::CombinedCorrCos), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn orthogonal_anticorrelated() {
        let (x, y) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(cosine(&x, &y), 0.0);
        assert_abs_diff_eq!(correlation(&x, &y), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(similarity(&x, &y, MetricKind::CombinedCorrCos), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_vector_cosine() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.3, 0.7]), 0.0);
        assert_eq!(cosine_grad(&[0.0, 0.0], &[0.3, 0.7]), vec![0.0, 0.0]);
    }

    #[test]
    fn distances() {
        let (x, y) = ([0.2, 0.5, 0.3], [0.6, 0.1, 0.3]);
        assert_abs_diff_eq!(similarity(&x, &y, MetricKind::Manhattan), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(similarity(&x, &y, MetricKind::Chebyshev), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(
            similarity(&x, &y, MetricKind::Euclidean),
            0.32f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn distance_kinds_have_no_gradient() {
        let r = similarity_gradient(&[0.5, 0.5], &[0.5, 0.5], &[0.0, 0.0], MetricKind::Euclidean);
        assert!(matches!(r, Err(GridError::UnsupportedMetric("euclidean"))));
    }

    #[test]
    fn constant_target_kills_correlation_gradient() {
        let y = [1.0 / 3.0; 3];
        let g = similarity_gradient(&[0.2, 0.5, 0.3], &y, &[0.01, -0.02, 0.01], MetricKind::Correlation).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn metric_names_round_trip() {
        for k in MetricKind::ALL {
            assert_eq!(k.name().parse::<MetricKind>().unwrap(), k);
        }
        assert!("jaccard".parse::<MetricKind>().is_err());
    }

    #[test]
    fn matrix_validation() {
        assert!(PredictionMatrix::new(vec![vec![0.5, 0.5], vec![0.9, 0.1]]).is_ok());
        assert!(PredictionMatrix::new(vec![vec![0.5, 0.6]]).is_err());
        assert!(PredictionMatrix::new(vec![vec![1.1, -0.1]]).is_err());
        assert!(PredictionMatrix::new(vec![vec![0.5, 0.5], vec![1.0]]).is_err());
    }

    #[test]
    fn tied_rows_detected() {
        let m = PredictionMatrix::new(vec![vec![0.5, 0.5], vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        assert_eq!(m.tied_argmax_rows(), vec![0]);
        assert_eq!(strict_argmax(&[0.4, 0.4, 0.2]), None);
        assert_eq!(strict_argmax(&[0.2, 0.5, 0.3]), Some(1));
    }

    #[test]
    fn mean_pairs() {
        let m = PredictionMatrix::new(vec![vec![0.7, 0.3], vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        assert!(matches!(
            mean_pair_similarity(&m, &[], MetricKind::Cosine),
            Err(GridError::EmptyPairs)
        ));
        let a = m.similarity(0, 1, MetricKind::CombinedCorrCos);
        let b = m.similarity(0, 2, MetricKind::CombinedCorrCos);
        assert_abs_diff_eq!(a, 2.0, epsilon = 1e-12);
        let mean = mean_pair_similarity(&m, &[(0, 1), (0, 2)], MetricKind::CombinedCorrCos).unwrap();
        assert_abs_diff_eq!(mean, (a + b) / 2.0, epsilon = 1e-15);
    }

    fn prob_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn prob_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..10).prop_flat_map(|n| (prob_vec(n), prob_vec(n)))
    }

    proptest! {
        #[test]
        fn symmetric((x, y) in prob_pair()) {
            for k in MetricKind::ALL {
                prop_assert!((similarity(&x, &y, k) - similarity(&y, &x, k)).abs() < 1e-12);
            }
        }

        #[test]
        fn bounded((x, y) in prob_pair()) {
            let c = cosine(&x, &y);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c));
            let r = correlation(&x, &y);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }

        #[test]
        fn self_similarity((x, _y) in prob_pair()) {
            let constant = x.iter().all(|&v| (v - x[0]).abs() < 1e-15);
            let expect = if constant { 1.0 } else { 2.0 };
            prop_assert!((similarity(&x, &x, MetricKind::CombinedCorrCos) - expect).abs() < 1e-9);
        }
    }
}
